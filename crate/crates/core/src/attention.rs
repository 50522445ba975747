//! Multi-head self-attention and the residual block built around it.
//!
//! Every head projects the full token width `C` (`W_Query`, `W_Key`,
//! `W_Value` are `C×C`); heads are concatenated to `h·C` and mapped back to
//! `C` by `W_Concate`. Logits are scaled by `1/√C`. Disallowed entries get
//! [`MASK_PENALTY`] before the softmax and the rows of padded queries are
//! zeroed afterwards.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{DropoutStream, Tape, Tensor, Var, MASK_PENALTY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhsabParams {
    pub width: usize,
    pub heads: usize,
    pub dropout: f64,
    pub w_query: Vec<ParamId>,
    pub w_key: Vec<ParamId>,
    pub w_value: Vec<ParamId>,
    pub w_concat: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl MhsabParams {
    /// Registers a block of token width `width` under `prefix`. Weights are
    /// drawn from `uniform(-1/√C, 1/√C)`; biases start at 0, layer-norm gains
    /// at 1.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::contract(format!(
                "{prefix}: head count must be at least 1"
            )));
        }
        if width < 2 {
            return Err(Error::contract(format!(
                "{prefix}: token width must be at least 2"
            )));
        }
        let bound = 1.0 / (width as f64).sqrt();
        let mut w = |store: &mut ParamStore, name: String, shape: &[usize]| {
            store.register(name, Tensor::uniform(shape, bound, rng))
        };
        let mut w_query = Vec::with_capacity(heads);
        let mut w_key = Vec::with_capacity(heads);
        let mut w_value = Vec::with_capacity(heads);
        for h in 0..heads {
            w_query.push(w(store, format!("{prefix}.w_query.{h}"), &[width, width]));
            w_key.push(w(store, format!("{prefix}.w_key.{h}"), &[width, width]));
            w_value.push(w(store, format!("{prefix}.w_value.{h}"), &[width, width]));
        }
        let w_concat = w(store, format!("{prefix}.w_concat"), &[heads * width, width]);
        let ffn_w1 = w(store, format!("{prefix}.ffn.w1"), &[width, width]);
        let ffn_w2 = w(store, format!("{prefix}.ffn.w2"), &[width, width]);
        let zeros = Tensor::zeros(&[width]);
        let ones = Tensor::full(&[width], 1.0);
        Ok(Self {
            width,
            heads,
            dropout,
            w_query,
            w_key,
            w_value,
            w_concat,
            ffn_w1,
            ffn_b1: store.register(format!("{prefix}.ffn.b1"), zeros.clone()),
            ffn_w2,
            ffn_b2: store.register(format!("{prefix}.ffn.b2"), zeros.clone()),
            ln1_gain: store.register(format!("{prefix}.ln1.gain"), ones.clone()),
            ln1_bias: store.register(format!("{prefix}.ln1.bias"), zeros.clone()),
            ln2_gain: store.register(format!("{prefix}.ln2.gain"), ones),
            ln2_bias: store.register(format!("{prefix}.ln2.bias"), zeros),
        })
    }
}

/// Which key positions each query may attend to, per sequence in a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub batch: usize,
    pub len: usize,
    /// `batch × len × len`, indexed `[b][query][key]`.
    pub allowed: Vec<bool>,
    /// `batch × len`; rows of dead queries are zeroed.
    pub live_queries: Vec<bool>,
}

impl AttentionMask {
    pub fn full(batch: usize, len: usize) -> Self {
        build_masks(&vec![true; batch * len], len, false)
    }

    pub fn is_allowed(&self, b: usize, q: usize, k: usize) -> bool {
        self.allowed[(b * self.len + q) * self.len + k]
    }

    fn penalty(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_PENALTY })
            .collect();
        Tensor::new(vec![self.batch, self.len, self.len], data).expect("mask shape")
    }

    fn query_gate(&self) -> Tensor {
        let data = self
            .live_queries
            .iter()
            .flat_map(|&q| std::iter::repeat(if q { 1.0 } else { 0.0 }).take(self.len))
            .collect();
        Tensor::new(vec![self.batch, self.len, self.len], data).expect("mask shape")
    }
}

/// Builds masks from per-position presence flags (`batch × len`, flattened).
///
/// Real queries attend to real keys, and with `causal` only to keys at or
/// before their own position. Padded queries attend nowhere.
pub fn build_masks(presence: &[bool], len: usize, causal: bool) -> AttentionMask {
    assert!(
        len > 0 && presence.len() % len == 0,
        "presence length must be a multiple of len"
    );
    let batch = presence.len() / len;
    let mut allowed = vec![false; batch * len * len];
    for b in 0..batch {
        let p = &presence[b * len..(b + 1) * len];
        for q in 0..len {
            if !p[q] {
                continue;
            }
            for k in 0..len {
                allowed[(b * len + q) * len + k] = p[k] && (!causal || k <= q);
            }
        }
    }
    AttentionMask {
        batch,
        len,
        allowed,
        live_queries: presence.to_vec(),
    }
}

/// Attention probabilities captured during a forward pass.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AttentionRecorder {
    pub entries: Vec<AttentionDump>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionDump {
    pub label: String,
    pub head: usize,
    pub batch: usize,
    pub len: usize,
    /// `batch × len × len` row-stochastic weights (zero rows for padded queries).
    pub weights: Vec<f64>,
}

/// Per-pass state threaded through every block.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub dropout: DropoutStream,
    pub recorder: Option<&'r mut AttentionRecorder>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: DropoutStream::new(0, 0),
            recorder: None,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            training: true,
            dropout: DropoutStream::new(seed, step),
            recorder: None,
        }
    }

    pub fn with_recorder(mut self, recorder: &'r mut AttentionRecorder) -> Self {
        self.recorder = Some(recorder);
        self
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = self.dropout.next_rng();
        tape.dropout(x, p, true, &mut rng)
    }
}

fn check_input(
    tape: &Tape,
    x: Var,
    p: &MhsabParams,
    mask: &AttentionMask,
) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != p.width {
        return Err(Error::Dimension {
            op: "mhsa",
            lhs: s.to_vec(),
            rhs: vec![p.width],
        });
    }
    if s[0] != mask.batch || s[1] != mask.len {
        return Err(Error::Dimension {
            op: "mhsa mask",
            lhs: s.to_vec(),
            rhs: vec![mask.batch, mask.len, mask.len],
        });
    }
    Ok((s[0], s[1]))
}

/// Multi-head self-attention over `x: [B, L, C]`, returning `[B, L, C]`.
pub fn mhsa(
    tape: &mut Tape,
    binder: &mut Binder,
    x: Var,
    p: &MhsabParams,
    mask: &AttentionMask,
    ctx: &mut ForwardCtx,
    label: &str,
) -> Result<Var> {
    let (b, l) = check_input(tape, x, p, mask)?;
    let c = p.width;
    let flat = tape.reshape(x, &[b * l, c])?;
    let penalty = tape.constant(mask.penalty());
    let gate = tape.constant(mask.query_gate());
    let scale = 1.0 / (c as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let wq = binder.var(tape, p.w_query[h]);
        let wk = binder.var(tape, p.w_key[h]);
        let wv = binder.var(tape, p.w_value[h]);
        let q = tape.matmul(flat, wq)?;
        let q = tape.reshape(q, &[b, l, c])?;
        let k = tape.matmul(flat, wk)?;
        let k = tape.reshape(k, &[b, l, c])?;
        let v = tape.matmul(flat, wv)?;
        let v = tape.reshape(v, &[b, l, c])?;
        let logits = tape.bmm(q, k, true)?;
        let logits = tape.scale(logits, scale);
        let logits = tape.add(logits, penalty)?;
        let weights = tape.softmax_last(logits);
        let weights = tape.mul(weights, gate)?;
        if let Some(rec) = ctx.recorder.as_deref_mut() {
            rec.entries.push(AttentionDump {
                label: label.to_string(),
                head: h,
                batch: b,
                len: l,
                weights: tape.value(weights).data().to_vec(),
            });
        }
        let out = tape.bmm(weights, v, false)?;
        heads.push(tape.reshape(out, &[b * l, c])?);
    }
    let cat = tape.concat_last(&heads)?;
    let wc = binder.var(tape, p.w_concat);
    let out = tape.matmul(cat, wc)?;
    tape.reshape(out, &[b, l, c])
}

/// Full block, post-norm:
/// `y = LN(x + Dropout(MHSA(x)))`, `out = LN(y + Dropout(FFN(y)))`
/// with `FFN(y) = ReLU(y·W1 + b1)·W2 + b2`.
pub fn mhsab(
    tape: &mut Tape,
    binder: &mut Binder,
    x: Var,
    p: &MhsabParams,
    mask: &AttentionMask,
    ctx: &mut ForwardCtx,
    label: &str,
) -> Result<Var> {
    let attn = mhsa(tape, binder, x, p, mask, ctx, label)?;
    let attn = ctx.dropout(tape, attn, p.dropout)?;
    let res = tape.add(x, attn)?;
    let (g1, b1) = (binder.var(tape, p.ln1_gain), binder.var(tape, p.ln1_bias));
    let y = tape.layer_norm(res, g1, b1)?;

    let w1 = binder.var(tape, p.ffn_w1);
    let fb1 = binder.var(tape, p.ffn_b1);
    let w2 = binder.var(tape, p.ffn_w2);
    let fb2 = binder.var(tape, p.ffn_b2);
    let h = tape.matmul(y, w1)?;
    let h = tape.add_row(h, fb1)?;
    let h = tape.relu(h);
    let f = tape.matmul(h, w2)?;
    let f = tape.add_row(f, fb2)?;
    let f = ctx.dropout(tape, f, p.dropout)?;
    let res = tape.add(y, f)?;
    let (g2, b2) = (binder.var(tape, p.ln2_gain), binder.var(tape, p.ln2_bias));
    tape.layer_norm(res, g2, b2)
}

/// Applies blocks in order; `L(k) = MHSAB(L(k-1), h_k)`.
pub fn stack(
    tape: &mut Tape,
    binder: &mut Binder,
    x: Var,
    blocks: &[MhsabParams],
    mask: &AttentionMask,
    ctx: &mut ForwardCtx,
    label: &str,
) -> Result<Var> {
    if blocks.is_empty() {
        debug!("{label}: empty block stack acts as identity");
        return Ok(x);
    }
    let width = blocks[0].width;
    if blocks.iter().any(|b| b.width != width) {
        return Err(Error::contract(format!(
            "{label}: blocks disagree on token width"
        )));
    }
    let mut h = x;
    for (i, block) in blocks.iter().enumerate() {
        h = mhsab(tape, binder, h, block, mask, ctx, &format!("{label}.{i}"))?;
    }
    Ok(h)
}
