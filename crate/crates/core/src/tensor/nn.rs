//! Layers built from tape primitives.

use rand::Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Additive score for masked attention keys.
const MASKED_SCORE: f64 = -1e9;

/// Parameter names of an affine map `x W + b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: String,
    pub bias: String,
}

impl LinearParams {
    pub fn new(prefix: &str) -> Self {
        LinearParams {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
        }
    }

    /// Register `W[inp, out] ~ N(0, std)` and a zero bias.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, inp: usize, out: usize, std: f64, rng: &mut R) -> Result<()> {
        store.insert_normal(&self.weight, &[inp, out], std, rng)?;
        store.insert_full(&self.bias, &[out], 0.0)
    }
}

pub fn linear(tape: &mut Tape, store: &ParamStore, x: Var, p: &LinearParams) -> Result<Var> {
    let w = tape.param(store, &p.weight)?;
    let b = tape.param(store, &p.bias)?;
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Bidirectional scaled dot-product attention with `n_heads` heads.
///
/// `x` stacks several sequences row-wise; `spans` gives each sequence as
/// `(start, len)` and attention never crosses spans. `key_mask[i] == false`
/// excludes row `i` as a key. Parameters live under `{prefix}.{q,k,v,o}`.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    prefix: &str,
    n_heads: usize,
    spans: &[(usize, usize)],
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!("hidden size {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(tape, store, x, &LinearParams::new(&format!("{prefix}.q")))?;
    let k = linear(tape, store, x, &LinearParams::new(&format!("{prefix}.k")))?;
    let v = linear(tape, store, x, &LinearParams::new(&format!("{prefix}.v")))?;

    let mut outputs = Vec::with_capacity(spans.len());
    for &(start, len) in spans {
        let end = start + len;
        let (qs, ks, vs) = if spans.len() == 1 && start == 0 && len == tape.value(x).rows() {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, start, end)?,
                tape.slice_rows(k, start, end)?,
                tape.slice_rows(v, start, end)?,
            )
        };
        let mask = match key_mask {
            Some(m) if m[start..end].iter().any(|ok| !ok) => {
                let mut data = vec![0.0; len * len];
                for row in data.chunks_mut(len) {
                    for (j, cell) in row.iter_mut().enumerate() {
                        if !m[start + j] {
                            *cell = MASKED_SCORE;
                        }
                    }
                }
                Some(tape.constant(Tensor::new(vec![len, len], data)?)?)
            }
            _ => None,
        };
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if n_heads == 1 {
                (qs, ks, vs)
            } else {
                (
                    tape.slice_cols(qs, c0, c1)?,
                    tape.slice_cols(ks, c0, c1)?,
                    tape.slice_cols(vs, c0, c1)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(raw, scale)?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let probs = tape.softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        outputs.push(if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? });
    }
    let joined = if outputs.len() == 1 { outputs[0] } else { tape.concat_rows(&outputs)? };
    linear(tape, store, joined, &LinearParams::new(&format!("{prefix}.o")))
}

/// Register `{prefix}.{q,k,v,o}` projections for a `d`-wide attention block.
pub fn init_attention<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, std: f64, rng: &mut R) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        LinearParams::new(&format!("{prefix}.{part}")).init(store, d, d, std, rng)?;
    }
    Ok(())
}

/// Parameter names of a gated recurrent unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruParams {
    prefix: String,
}

impl GruParams {
    pub fn new(prefix: &str) -> Self {
        GruParams {
            prefix: prefix.to_string(),
        }
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Message weights `w*` and state weights `u*` ~ N(0, std), zero biases.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, d: usize, std: f64, rng: &mut R) -> Result<()> {
        for gate in ["z", "r", "h"] {
            store.insert_normal(&self.name(&format!("w{gate}")), &[d, d], std, rng)?;
            store.insert_normal(&self.name(&format!("u{gate}")), &[d, d], std, rng)?;
            store.insert_full(&self.name(&format!("b{gate}")), &[d], 0.0)?;
        }
        Ok(())
    }
}

fn gate(tape: &mut Tape, store: &ParamStore, p: &GruParams, g: &str, msg: Var, state: Var) -> Result<Var> {
    let w = tape.param(store, &p.name(&format!("w{g}")))?;
    let u = tape.param(store, &p.name(&format!("u{g}")))?;
    let b = tape.param(store, &p.name(&format!("b{g}")))?;
    let mw = tape.matmul(msg, w)?;
    let su = tape.matmul(state, u)?;
    let s = tape.add(mw, su)?;
    tape.add_bias(s, b)
}

/// One GRU update of `state[n, d]` with `message[n, d]`:
/// `z = σ(a Wz + h Uz + bz)`, `r = σ(a Wr + h Ur + br)`,
/// `h~ = tanh(a Wh + (r ⊙ h) Uh + bh)`, `h' = h + z ⊙ (h~ - h)`.
pub fn gru_cell(tape: &mut Tape, store: &ParamStore, state: Var, message: Var, p: &GruParams) -> Result<Var> {
    let (ts, tm) = (tape.value(state), tape.value(message));
    if ts.shape() != tm.shape() {
        return Err(Error::shape("gru_cell", ts.shape(), tm.shape()));
    }
    let z_pre = gate(tape, store, p, "z", message, state)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, store, p, "r", message, state)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, state)?;
    let cand_pre = gate(tape, store, p, "h", message, rh)?;
    let cand = tape.tanh(cand_pre)?;
    let diff = tape.sub(cand, state)?;
    let step = tape.mul(z, diff)?;
    tape.add(state, step)
}
