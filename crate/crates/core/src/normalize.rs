//! Sub-instruction tokenization and identifier/constant normalization.
//!
//! Tokenization splits on whitespace, emits `, ( ) [ ] { }` as standalone
//! tokens, and treats `.` and `_` as separators that are dropped. Two
//! identifier shapes stay whole so that normalization can recognise them:
//! block references `%dec_label_pc_<hex>` and globals `@global_var_<x>`.
//!
//! Normalization rewrites, in order:
//!
//! 1. block references to `<label>`,
//! 2. globals to `<global>`,
//! 3. decimal literals below 1024 in magnitude, and all hexadecimal
//!    literals, to `<Positive>` / `<Negative>` by sign,
//! 4. decimal literals of magnitude 1024 or more to `<Address>`,
//! 5. identifiers whose stem is one of [`DEFAULT_STEMS`] lose their numeric
//!    prefix and suffix (`%storemerge518` becomes `%storemerge`).
//!
//! A number is treated as a literal only in operand position: first in the
//! sequence, or after a type, `,`, `=`, or an opening bracket. Numbers that
//! come out of a split identifier (`%s1.0.reg2mem`) or that follow
//! `align` are left alone.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
/// Number of reserved ids; ordinary tokens start here.
pub const N_SPECIAL: u32 = 5;

pub const LABEL_TOKEN: &str = "<label>";
pub const GLOBAL_TOKEN: &str = "<global>";
pub const POSITIVE_TOKEN: &str = "<Positive>";
pub const NEGATIVE_TOKEN: &str = "<Negative>";
pub const ADDRESS_TOKEN: &str = "<Address>";

/// Decimal literals at or above this magnitude are addresses.
pub const ADDRESS_THRESHOLD: u64 = 1024;

pub const DEFAULT_STEMS: &[&str] = &[
    "reg2mem",
    "reload",
    "storemerge",
    "brmerge",
    "select",
    "thread",
    "cond",
];

fn label_ref_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^%dec_label_pc_[0-9A-Fa-f]+$").unwrap())
}

fn global_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^@global_var_[0-9A-Za-z]+$").unwrap())
}

fn type_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(i\d+|half|bfloat|float|double|fp128|x86_fp80|ppc_fp128|ptr|void)\**$").unwrap()
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn join(&self) -> String {
        self.tokens.join(" ")
    }
}

impl From<Vec<&str>> for TokenSequence {
    fn from(tokens: Vec<&str>) -> Self {
        TokenSequence {
            tokens: tokens.into_iter().map(String::from).collect(),
        }
    }
}

fn is_standalone_punct(c: char) -> bool {
    matches!(c, ',' | '(' | ')' | '[' | ']' | '{' | '}')
}

fn push_piece(piece: &str, out: &mut Vec<String>) {
    if piece.is_empty() {
        return;
    }
    if label_ref_re().is_match(piece) || global_re().is_match(piece) {
        out.push(piece.to_string());
        return;
    }
    out.extend(
        piece
            .split(['.', '_'])
            .filter(|p| !p.is_empty())
            .map(String::from),
    );
}

pub fn tokenize(instruction: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    for chunk in instruction.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if is_standalone_punct(c) {
                push_piece(&chunk[start..i], &mut tokens);
                tokens.push(c.to_string());
                start = i + c.len_utf8();
            }
        }
        push_piece(&chunk[start..], &mut tokens);
    }
    TokenSequence { tokens }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Literal {
    Positive,
    Negative,
    Address,
}

fn classify_literal(token: &str) -> Option<Literal> {
    let (negative, digits) = match token.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, token),
    };
    let sign = if negative {
        Literal::Negative
    } else {
        Literal::Positive
    };
    if let Some(hex) = digits
        .strip_prefix("0x")
        .or_else(|| digits.strip_prefix("0X"))
    {
        return (!hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit())).then_some(sign);
    }
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let significant = digits.trim_start_matches('0');
    let large = !significant.is_empty()
        && (significant.len() > 19
            || significant.parse::<u64>().map_or(true, |v| v >= ADDRESS_THRESHOLD));
    Some(if large { Literal::Address } else { sign })
}

fn literal_context(prev: Option<&str>) -> bool {
    match prev {
        None => true,
        Some(p) => matches!(p, "," | "(" | "[" | "{" | "=") || type_re().is_match(p),
    }
}

/// Normalization settings. `stems` drives rule 5.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeConfig {
    pub stems: Vec<String>,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            stems: DEFAULT_STEMS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn strip_stem_digits(token: &str, stems: &[String]) -> Option<String> {
    let (sigil, body) = match token.chars().next() {
        Some(c @ ('%' | '@')) => (Some(c), &token[1..]),
        _ => (None, token),
    };
    let core = body
        .trim_start_matches(|c: char| c.is_ascii_digit())
        .trim_end_matches(|c: char| c.is_ascii_digit());
    if core.len() == body.len() || !stems.iter().any(|s| s == core) {
        return None;
    }
    let mut out = String::with_capacity(core.len() + 1);
    out.extend(sigil);
    out.push_str(core);
    Some(out)
}

/// Apply the five rules with the default stem set.
pub fn normalize(tokens: &TokenSequence) -> TokenSequence {
    normalize_with(tokens, &NormalizeConfig::default())
}

pub fn normalize_with(tokens: &TokenSequence, config: &NormalizeConfig) -> TokenSequence {
    let mut out = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.tokens.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| tokens.tokens[j].as_str());
        let rewritten = if label_ref_re().is_match(tok) {
            LABEL_TOKEN.to_string()
        } else if global_re().is_match(tok) {
            GLOBAL_TOKEN.to_string()
        } else if let Some(lit) = classify_literal(tok).filter(|_| literal_context(prev)) {
            match lit {
                Literal::Positive => POSITIVE_TOKEN,
                Literal::Negative => NEGATIVE_TOKEN,
                Literal::Address => ADDRESS_TOKEN,
            }
            .to_string()
        } else if let Some(stripped) = strip_stem_digits(tok, &config.stems) {
            stripped
        } else {
            tok.clone()
        };
        out.push(rewritten);
    }
    TokenSequence { tokens: out }
}

/// Tokenize, then normalize unless `enabled` is false.
pub fn process_instruction(instruction: &str, config: &NormalizeConfig, enabled: bool) -> TokenSequence {
    let tokens = tokenize(instruction);
    if enabled {
        normalize_with(&tokens, config)
    } else {
        tokens
    }
}

/// Token/id mapping with five reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, u32>,
    token_of: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let token_of: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        let id_of = token_of
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { id_of, token_of }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.token_of.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    /// `{token: id}` for persistence.
    pub fn to_map(&self) -> BTreeMap<String, u32> {
        self.id_of.iter().map(|(t, i)| (t.clone(), *i)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, u32>) -> crate::Result<Self> {
        let mut token_of = vec![String::new(); map.len()];
        for (tok, &id) in map {
            let slot = token_of
                .get_mut(id as usize)
                .ok_or_else(|| crate::Error::Input(format!("vocabulary id {id} out of range")))?;
            if !slot.is_empty() {
                return Err(crate::Error::Input(format!("vocabulary id {id} assigned twice")));
            }
            *slot = tok.clone();
        }
        let specials = [PAD, UNK, CLS, SEP, MASK];
        if token_of.len() < specials.len() || token_of[..specials.len()] != specials {
            return Err(crate::Error::Input("vocabulary lacks reserved ids 0-4".into()));
        }
        Ok(Vocabulary {
            id_of: map.iter().map(|(t, i)| (t.clone(), *i)).collect(),
            token_of,
        })
    }
}

/// Build a vocabulary from training-split token sequences. Tokens with at
/// least `min_count` occurrences get ids in order of descending frequency,
/// ties broken lexicographically.
pub fn build_vocabulary<'a, I>(corpus: I, min_count: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a TokenSequence>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in corpus {
        for tok in &seq.tokens {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut vocab = Vocabulary::default();
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !vocab.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    for (tok, _) in ranked {
        let id = vocab.token_of.len() as u32;
        vocab.token_of.push(tok.to_string());
        vocab.id_of.insert(tok.to_string(), id);
    }
    vocab
}

pub fn encode(tokens: &TokenSequence, vocab: &Vocabulary) -> Vec<u32> {
    tokens
        .tokens
        .iter()
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .collect()
}

pub fn decode(ids: &[u32], vocab: &Vocabulary) -> TokenSequence {
    TokenSequence {
        tokens: ids
            .iter()
            .map(|&i| vocab.token(i).unwrap_or(UNK).to_string())
            .collect(),
    }
}
