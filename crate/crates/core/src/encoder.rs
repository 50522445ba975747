//! Turns a user's history into fixed-length branch token sequences.
//!
//! A window covers the last `T` calendar steps ending at the user's final
//! basket. Steps without a basket stay in place as zero tokens, so the gaps
//! between baskets survive into the layout. Each real step's item token is
//! the concatenation of `|V_max|` padded item embeddings followed by a
//! positional and (optionally) a periodic embedding. Attribute branches are
//! built the same way from the attribute records in the window.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{AttributeRecord, Basket, TimeIndex, UserSequence};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Shape parameters shared by every encoded sequence of one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub max_len: usize,
    pub period: usize,
    pub vmax: usize,
    pub embed_dim: usize,
    pub num_cat_attrs: usize,
    pub num_numerical: usize,
    pub use_periodic: bool,
    /// `false` packs baskets contiguously against the right edge instead.
    pub time_aware_padding: bool,
}

impl LayoutSpec {
    fn index_slots(&self) -> usize {
        1 + usize::from(self.use_periodic)
    }

    /// Tokens per step seen by intra-basket attention.
    pub fn item_tokens(&self) -> usize {
        self.vmax + self.index_slots()
    }

    pub fn cat_tokens(&self) -> usize {
        self.num_cat_attrs + self.index_slots()
    }

    pub fn item_width(&self) -> usize {
        self.item_tokens() * self.embed_dim
    }

    pub fn cat_width(&self) -> usize {
        self.cat_tokens() * self.embed_dim
    }

    pub fn num_width(&self) -> usize {
        self.num_numerical + self.index_slots() * self.embed_dim
    }
}

/// Placement of a user's observations inside the window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedWindow {
    /// Calendar step of each position; `None` for left padding.
    pub steps: Vec<Option<TimeIndex>>,
    /// Index into the user's baskets for positions holding one.
    pub baskets: Vec<Option<usize>>,
    /// Index into the user's attribute records.
    pub attributes: Vec<Option<usize>>,
}

/// Lays the last `len` calendar steps ending at the final basket onto
/// positions `0..len`; steps with no basket stay empty.
pub fn time_aware_pad(seq: &UserSequence, len: usize) -> Result<PaddedWindow> {
    if len == 0 {
        return Err(Error::contract("window length must be at least 1"));
    }
    let end = seq
        .last_time()
        .ok_or_else(|| Error::contract(format!("user {} has no baskets to encode", seq.user_id)))?;
    let start = end - (len as TimeIndex - 1);
    let mut w = PaddedWindow {
        steps: (0..len).map(|p| Some(start + p as TimeIndex)).collect(),
        baskets: vec![None; len],
        attributes: vec![None; len],
    };
    for (i, b) in seq.baskets.iter().enumerate() {
        if b.time_index >= start {
            w.baskets[(b.time_index - start) as usize] = Some(i);
        }
    }
    for (i, a) in seq.attributes.iter().enumerate() {
        if a.time_index >= start && a.time_index <= end {
            w.attributes[(a.time_index - start) as usize] = Some(i);
        }
    }
    Ok(w)
}

/// Conventional left padding: the last `len` baskets packed against the
/// right edge, ignoring calendar gaps. Attributes are kept only where they
/// share a basket's step.
pub fn left_pad(seq: &UserSequence, len: usize) -> Result<PaddedWindow> {
    if len == 0 {
        return Err(Error::contract("window length must be at least 1"));
    }
    if seq.baskets.is_empty() {
        return Err(Error::contract(format!(
            "user {} has no baskets to encode",
            seq.user_id
        )));
    }
    let keep = seq.baskets.len().min(len);
    let first = seq.baskets.len() - keep;
    let offset = len - keep;
    let mut w = PaddedWindow {
        steps: vec![None; len],
        baskets: vec![None; len],
        attributes: vec![None; len],
    };
    for (k, i) in (first..seq.baskets.len()).enumerate() {
        let t = seq.baskets[i].time_index;
        w.steps[offset + k] = Some(t);
        w.baskets[offset + k] = Some(i);
        w.attributes[offset + k] = seq.attributes.iter().position(|a| a.time_index == t);
    }
    Ok(w)
}

/// Item ids of a basket in canonical ascending order, cut to `vmax`
/// (lowest ids kept) and padded with slot-mask `false` entries.
pub fn pad_basket(basket: &Basket, vmax: usize) -> (Vec<usize>, Vec<bool>) {
    if basket.len() > vmax {
        warn!(
            "basket at step {} has {} items; truncating to {vmax}",
            basket.time_index,
            basket.len()
        );
    }
    let mut ids = vec![0; vmax];
    let mut mask = vec![false; vmax];
    for (slot, &item) in basket.items().iter().take(vmax).enumerate() {
        ids[slot] = item;
        mask[slot] = true;
    }
    (ids, mask)
}

/// Positional and periodic table rows for window position `t`.
pub fn position_rows(t: usize, period: usize) -> (usize, usize) {
    (t, t % period)
}

/// Index-level encoding of one sequence; embedding values are attached on a
/// tape by [`build_tokens`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub user_id: u64,
    pub len: usize,
    pub steps: Vec<Option<TimeIndex>>,
    /// Whether each position holds a basket.
    pub presence: Vec<bool>,
    /// `len × vmax` item ids (0 under masked slots).
    pub item_ids: Vec<usize>,
    pub item_slots: Vec<bool>,
    /// Whether each position holds an attribute record.
    pub attr_presence: Vec<bool>,
    /// `len × num_cat_attrs` global categorical value ids.
    pub cat_ids: Vec<usize>,
    /// `len × num_numerical` normalised values.
    pub num_values: Vec<f64>,
    /// For training sequences: the next basket after each real position.
    pub targets: Vec<Option<Vec<usize>>>,
}

impl EncodedSequence {
    /// Position whose output scores the next basket.
    pub fn last_position(&self) -> usize {
        self.len - 1
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

fn encode_window(seq: &UserSequence, window: &PaddedWindow, spec: &LayoutSpec) -> EncodedSequence {
    let len = spec.max_len;
    let mut e = EncodedSequence {
        user_id: seq.user_id,
        len,
        steps: window.steps.clone(),
        presence: vec![false; len],
        item_ids: vec![0; len * spec.vmax],
        item_slots: vec![false; len * spec.vmax],
        attr_presence: vec![false; len],
        cat_ids: vec![0; len * spec.num_cat_attrs],
        num_values: vec![0.0; len * spec.num_numerical],
        targets: vec![None; len],
    };
    for p in 0..len {
        if let Some(bi) = window.baskets[p] {
            let (ids, mask) = pad_basket(&seq.baskets[bi], spec.vmax);
            e.presence[p] = true;
            e.item_ids[p * spec.vmax..(p + 1) * spec.vmax].copy_from_slice(&ids);
            e.item_slots[p * spec.vmax..(p + 1) * spec.vmax].copy_from_slice(&mask);
        }
        if let Some(ai) = window.attributes[p] {
            let r: &AttributeRecord = &seq.attributes[ai];
            e.attr_presence[p] = true;
            let nc = spec.num_cat_attrs;
            e.cat_ids[p * nc..(p + 1) * nc].copy_from_slice(&r.categorical[..nc]);
            let nn = spec.num_numerical;
            e.num_values[p * nn..(p + 1) * nn].copy_from_slice(&r.numerical[..nn]);
        }
    }
    e
}

fn window_for(seq: &UserSequence, spec: &LayoutSpec) -> Result<PaddedWindow> {
    if spec.time_aware_padding {
        time_aware_pad(seq, spec.max_len)
    } else {
        left_pad(seq, spec.max_len)
    }
}

/// Encodes everything in `seq` as context for predicting the basket that
/// follows its last one.
pub fn encode_context(seq: &UserSequence, spec: &LayoutSpec) -> Result<EncodedSequence> {
    let window = window_for(seq, spec)?;
    Ok(encode_window(seq, &window, spec))
}

/// Encodes a training sequence: all baskets but the last are inputs, and
/// every real input position targets the next basket.
pub fn encode_training(seq: &UserSequence, spec: &LayoutSpec) -> Result<EncodedSequence> {
    if seq.baskets.len() < 2 {
        return Err(Error::contract(format!(
            "user {} needs at least two baskets for training",
            seq.user_id
        )));
    }
    let last = seq.baskets.len() - 1;
    let cutoff = seq.baskets[last - 1].time_index;
    let inputs = UserSequence {
        user_id: seq.user_id,
        baskets: seq.baskets[..last].to_vec(),
        attributes: seq
            .attributes
            .iter()
            .filter(|a| a.time_index <= cutoff)
            .cloned()
            .collect(),
    };
    let window = window_for(&inputs, spec)?;
    let mut e = encode_window(&inputs, &window, spec);
    for p in 0..spec.max_len {
        if let Some(bi) = window.baskets[p] {
            e.targets[p] = Some(seq.baskets[bi + 1].items().to_vec());
        }
    }
    Ok(e)
}

/// Embedding tables: items `Q` (shared with scoring), categorical values
/// `R`, positions `P`, periodic indices `M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub item: ParamId,
    pub categorical: Option<ParamId>,
    pub positional: ParamId,
    pub periodic: Option<ParamId>,
}

/// Gathers `table[ids[i]]` into a `|ids| × D` matrix.
pub fn concat_lookup(tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
    tape.gather_rows(table, ids)
}

/// Branch token tensors for a batch, each `[B, T, C]`.
#[derive(Clone, Debug)]
pub struct BranchTokens {
    pub item: Var,
    pub categorical: Option<Var>,
    pub numerical: Option<Var>,
}

fn row_mask(mask: &[bool], width: usize) -> Tensor {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(width))
        .collect();
    Tensor::new(vec![mask.len(), width], data).expect("mask shape")
}

/// Appends masked positional and periodic rows to `parts`.
fn index_embeddings(
    tape: &mut Tape,
    binder: &mut Binder,
    tables: &EmbeddingTables,
    spec: &LayoutSpec,
    presence: &[bool],
    mask: Var,
    parts: &mut Vec<Var>,
) -> Result<()> {
    let rows = presence.len();
    let pos: Vec<(usize, usize)> = (0..rows)
        .map(|r| position_rows(r % spec.max_len, spec.period))
        .collect();
    let p = binder.var(tape, tables.positional);
    let pv = concat_lookup(tape, p, &pos.iter().map(|x| x.0).collect::<Vec<_>>())?;
    parts.push(tape.mul(pv, mask)?);
    if let Some(m) = tables.periodic {
        let m = binder.var(tape, m);
        let mv = concat_lookup(tape, m, &pos.iter().map(|x| x.1).collect::<Vec<_>>())?;
        parts.push(tape.mul(mv, mask)?);
    }
    Ok(())
}

/// Materialises branch tokens for a batch of encoded sequences.
pub fn build_tokens(
    tape: &mut Tape,
    binder: &mut Binder,
    tables: &EmbeddingTables,
    spec: &LayoutSpec,
    batch: &[EncodedSequence],
    use_attributes: bool,
) -> Result<BranchTokens> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let b = batch.len();
    let t = spec.max_len;
    let d = spec.embed_dim;
    if batch.iter().any(|e| e.len != t) {
        return Err(Error::contract(
            "encoded sequence length does not match the model",
        ));
    }
    let presence: Vec<bool> = batch
        .iter()
        .flat_map(|e| e.presence.iter().copied())
        .collect();
    let step_mask = tape.constant(row_mask(&presence, d));

    let q = binder.var(tape, tables.item);
    let ids: Vec<usize> = batch
        .iter()
        .flat_map(|e| e.item_ids.iter().copied())
        .collect();
    let slots: Vec<bool> = batch
        .iter()
        .flat_map(|e| e.item_slots.iter().copied())
        .collect();
    let items = concat_lookup(tape, q, &ids)?;
    let slot_mask = tape.constant(row_mask(&slots, d));
    let items = tape.mul(items, slot_mask)?;
    let items = tape.reshape(items, &[b * t, spec.vmax * d])?;
    let mut parts = vec![items];
    index_embeddings(tape, binder, tables, spec, &presence, step_mask, &mut parts)?;
    let item = tape.concat_last(&parts)?;
    let item = tape.reshape(item, &[b, t, spec.item_width()])?;

    let mut categorical = None;
    let mut numerical = None;
    if use_attributes && (spec.num_cat_attrs > 0 || spec.num_numerical > 0) {
        let attr: Vec<bool> = batch
            .iter()
            .flat_map(|e| e.attr_presence.iter().copied())
            .collect();
        let attr_mask = tape.constant(row_mask(&attr, d));
        if spec.num_cat_attrs > 0 {
            let table = tables
                .categorical
                .ok_or_else(|| Error::contract("categorical table missing"))?;
            let r = binder.var(tape, table);
            let ids: Vec<usize> = batch
                .iter()
                .flat_map(|e| e.cat_ids.iter().copied())
                .collect();
            let present: Vec<bool> = attr
                .iter()
                .flat_map(|&p| std::iter::repeat(p).take(spec.num_cat_attrs))
                .collect();
            let vals = concat_lookup(tape, r, &ids)?;
            let m = tape.constant(row_mask(&present, d));
            let vals = tape.mul(vals, m)?;
            let vals = tape.reshape(vals, &[b * t, spec.num_cat_attrs * d])?;
            let mut parts = vec![vals];
            index_embeddings(tape, binder, tables, spec, &attr, attr_mask, &mut parts)?;
            let c = tape.concat_last(&parts)?;
            categorical = Some(tape.reshape(c, &[b, t, spec.cat_width()])?);
        }
        if spec.num_numerical > 0 {
            let vals: Vec<f64> = batch
                .iter()
                .flat_map(|e| e.num_values.iter().copied())
                .collect();
            let vals = tape.constant(Tensor::new(vec![b * t, spec.num_numerical], vals)?);
            let mut parts = vec![vals];
            index_embeddings(tape, binder, tables, spec, &attr, attr_mask, &mut parts)?;
            let n = tape.concat_last(&parts)?;
            numerical = Some(tape.reshape(n, &[b, t, spec.num_width()])?);
        }
    }
    Ok(BranchTokens {
        item,
        categorical,
        numerical,
    })
}

impl EmbeddingTables {
    pub fn register(
        store: &mut ParamStore,
        spec: &LayoutSpec,
        num_items: usize,
        num_cat_values: usize,
        use_attributes: bool,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let d = spec.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let item = store.register("embed.item", Tensor::uniform(&[num_items, d], bound, rng));
        let categorical = (use_attributes && num_cat_values > 0).then(|| {
            store.register(
                "embed.categorical",
                Tensor::uniform(&[num_cat_values, d], bound, rng),
            )
        });
        let positional = store.register(
            "embed.positional",
            Tensor::uniform(&[spec.max_len, d], bound, rng),
        );
        let periodic = spec.use_periodic.then(|| {
            store.register(
                "embed.periodic",
                Tensor::uniform(&[spec.period, d], bound, rng),
            )
        });
        Self {
            item,
            categorical,
            positional,
            periodic,
        }
    }
}
